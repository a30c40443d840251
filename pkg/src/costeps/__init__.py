"""Flow-matching video DiT on toy grid-reasoning tasks, with probing tools."""
__version__ = "0.1.0"

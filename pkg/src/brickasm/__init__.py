"""Multi-view brick assembly: scene generation, pose recovery, relation graphs and plans."""

__version__ = "0.1.0"

"""Sharded proof-of-work blockchain with bandwidth-clustered shard formation."""

__version__ = "0.1.0"

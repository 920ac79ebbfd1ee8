"""NFT market pipeline: ingestion, cleaning, transaction graphs,
wallet communities, and hierarchical price prediction."""

__version__ = "0.1.0"

"""Long-context attention patterns, LoRA adaptation and KV-cache eviction on a toy decoder."""

__version__ = "0.1.0"

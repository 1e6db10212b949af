"""HTTP layer: a FastAPI app exposing the workflows over JSON."""

from .app import create_app

__all__ = ["create_app"]

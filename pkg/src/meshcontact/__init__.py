"""Per-vertex body-scene contact prediction and mesh regression at desk scale."""

__version__ = "0.1.0"

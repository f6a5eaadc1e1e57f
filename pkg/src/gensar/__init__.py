"""Generative retrieval that serves search and recommendation from one
encoder-decoder, using item identifiers built by a joint residual-quantized
autoencoder over semantic and collaborative embeddings."""

__version__ = "0.1.0"

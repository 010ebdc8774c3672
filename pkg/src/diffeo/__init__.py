"""Diffeomorphic workspace mapping for multi-robot motion replication."""

"""Discrete-event simulation of the retrieval -> pre-processing -> ranking cascade."""

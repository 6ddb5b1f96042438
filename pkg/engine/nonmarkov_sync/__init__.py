"""Expectation synchronization of non-Markovian linear quantum systems."""

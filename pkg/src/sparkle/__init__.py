"""Decentralized stochastic bilevel optimization simulator."""

"""Numerical core: Riccati solver, noise laws, posterior potential,
preconditioned Langevin sampler and the episode simulator."""

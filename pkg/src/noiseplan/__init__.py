"""Certified noise-aware eVTOL motion planning.

Submodules:
    acoustics   decibel energy arithmetic and Leq windows
    state       vehicle state, dynamics, observers, zone files
    oracle      synthetic / recorded ground-truth noise sources
    partition   azimuth sectorization with bounded in-sector variation
    sampling    monotone hypercube datasets: active subdivision and lattices
    model       monotone sector networks, certified error bounds
    planner     ordinance-constrained kinodynamic RRT* and fleet scheduling
    cli         command-line pipeline with reproducible run manifests
"""

__version__ = "0.1.0"

"""Stiffness-aware planar grasp synthesis: FEM labels, grasp maps and a small CNN."""

__version__ = "0.1.0"

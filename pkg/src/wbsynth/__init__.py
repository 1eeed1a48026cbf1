"""Whole-body MR-to-CT synthesis on procedural phantoms: structure-guided
synthesis, MI-driven deformable registration and contrastive organ alignment,
with regional metrics and a PET attenuation-correction surrogate."""

__version__ = "0.1.0"

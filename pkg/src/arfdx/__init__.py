"""Multimodal diagnosis pipeline for acute-respiratory-failure cohorts."""

__version__ = "0.1.0"

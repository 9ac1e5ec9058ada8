"""Generative ReRAM variability model: training pipeline, virtual cells and crossbar arrays."""

"""Simulation harness: configs, synthetic cohorts, experiments, reports."""

"""Training, evaluation, synthetic data and sweeps."""

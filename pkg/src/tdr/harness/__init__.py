"""Training, prediction, evaluation reports, and gradient checking."""

"""Weight-perturbed fine-tuning on a synthetic composed-retrieval task.

The package is organized bottom-up:

- diffcore: reverse-mode autodiff over a fixed ten-op set
- params / checkpoint: named float64 tensors and their binary format
- model: fusion MLP + target projection, optional low-rank adapters
- loss: query-to-target contrastive objective
- perturb: adversarial / random weight perturbations with per-layer budgets
- trainer: SGD / AdamW loops with the two-pass perturbed update
- synthcir: seeded synthetic retrieval datasets
- evalkit: recall metrics, sharpness, loss-landscape probes
- cli: train / sweep / landscape / selfcheck commands
"""

__version__ = "0.1.0"

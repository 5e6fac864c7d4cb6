"""NumPy engine for the CNN-F convnet: layers, fine-tuning, data pipeline,
evaluation metrics, binary checkpoints, and a train/eval/report CLI."""

__version__ = "0.1.0"

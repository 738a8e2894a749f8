"""Teacher-student self-supervised pretraining for gastric X-ray patch
classification, with the surrounding patching, fine-tuning and patient-level
evaluation pipeline.
"""

__version__ = "0.1.0"

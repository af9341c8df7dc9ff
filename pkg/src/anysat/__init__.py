"""Scale-adaptive multimodal Earth-observation encoder with JEPA pretraining."""

__version__ = "0.1.0"

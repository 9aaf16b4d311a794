"""frappe-lite: a toy-scale, numpy-only rebuild of the FRAPPE two-stage
recipe (future-representation alignment with mixture-of-prefix-and-LoRA
experts) for a diffusion action policy."""

__version__ = "0.1.0"

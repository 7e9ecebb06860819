"""Lifelong emotional motion generation: VQ motion tokenizer, emotion
decoupling attention, LoRA expert mixture with gated routing, and a
continual-learning evaluation harness."""

__version__ = "0.1.0"

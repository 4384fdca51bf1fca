"""Synthetic automotive ultrasonic ground reflections: envelope pipeline,
Gamma clutter statistics, a reference corpus and a conditional GAN."""

__version__ = "0.1.0"

"""Knowledge-augmented vision-language gait classification on synthetic data."""

__version__ = "0.1.0"

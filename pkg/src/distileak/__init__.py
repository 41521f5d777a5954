"""distileak: a desk-scale lab for probing what distilled datasets leak."""

__version__ = "0.1.0"

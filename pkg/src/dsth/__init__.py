from .optimizer import DsthConfig, Variant, fit

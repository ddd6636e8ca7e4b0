"""Silent-video voice conversion: mel synthesis from silent video features,
facial-identity conversion and interpolation, and oracle-based evaluation on
a synthetic corpus with known identity latents."""

__version__ = "0.1.0"

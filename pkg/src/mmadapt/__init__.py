"""mmadapt: a desk-scale lab for steering a frozen byte-level LM with
pseudo tokens built from audio/vision feature sequences."""

__version__ = "0.1.0"

"""Slot-filling forced alignment at desk scale: a micro causal transformer
fills discrete timestamp indices into slots inserted in a transcript, with a
CTC forced-alignment baseline and a boundary-shift evaluation harness."""

__version__ = "0.1.0"

"""
hemoscan: intracranial hemorrhage detection on CT scans with a slice CNN,
feature selection and a bidirectional LSTM over the slice sequence
"""

__version__ = "1.0.0"

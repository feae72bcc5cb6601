"""Binary choice estimation with misclassified, partially validated outcomes."""
__version__ = "0.1.0"

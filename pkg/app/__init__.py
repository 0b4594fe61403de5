"""
Empirical best prediction under the bivariate nested error regression model.
"""

__version__ = "0.1.0"

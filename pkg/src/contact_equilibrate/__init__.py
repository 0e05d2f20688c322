"""Nitsche contact solver with equilibrated-stress error estimators."""

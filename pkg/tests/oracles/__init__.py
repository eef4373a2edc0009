"""Independent reference implementations used as test oracles.

Nothing here imports ``ipbac``; each oracle is written from the documented
formats and formulas so it can disagree with the package.
"""

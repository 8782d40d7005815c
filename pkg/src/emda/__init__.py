"""Online EM estimation of error covariances for ensemble data assimilation.

Submodules are imported directly (``from emda import filters``); the package
root stays import-light so the CLI can configure BLAS threading first.
"""

__version__ = "0.1.0"

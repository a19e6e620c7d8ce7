"""Fixed-effects panel estimators for count outcomes with a control-function IV.

Modules
-------
panel       balanced panel container, CSV ingestion, derived variables
linfe       within OLS, cluster-robust covariance, instrument F test
poissonfe   conditional-ML fixed-effects Poisson and its sandwich covariance
cfiv        two-step control-function estimator and entity bootstrap
eventstudy  abnormal values in event time
survival    Kaplan-Meier curves and group comparison
dyngmm      system GMM for dynamic panels, Hansen J and AR(m) tests
dgp         synthetic panels and a Monte Carlo harness
cli         command-line runs
"""

__version__ = "0.1.0"

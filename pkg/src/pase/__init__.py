"""Past-aware distribution system state estimation.

Modules
-------
network      feeder model and the DLF matrix
powerflow    backward/forward sweep power flow and PMU observation maps
loadmodel    synthetic household traces, aggregation, load-change statistics
measurement  PMU noise, pseudo-measurements and greedy PMU placement
wls          snapshot weighted-least-squares estimator
enkf         ensemble Kalman filter with time-differenced pseudo-measurements
theory       a-priori covariance analysis of both estimators
harness      scenarios, simulation runs, sweeps and result files
"""

__version__ = "0.1.0"

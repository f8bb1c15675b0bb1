# Riccati fixed-point iteration
RICCATI_TOL = 1e-10
RICCATI_MAX_ITER = 10_000
# Iterates beyond this norm are treated as divergent
RICCATI_DIVERGENCE_NORM = 1e150
# Condition number above which R + B^T P B counts as singular
INNER_MATRIX_MAX_COND = 1e14

# Newton minimization of the posterior potential
NEWTON_TOL = 1e-9
NEWTON_MAX_ITER = 100
ARMIJO_SLOPE = 1e-4
ARMIJO_FACTOR = 0.5
ARMIJO_MAX_BACKTRACKS = 60

# Langevin sampling
ULA_BLOWUP_NORM = 1e12
REJECTION_MAX_ATTEMPTS = 200

# Simulation
STATE_BLOWUP_NORM = 1e9
EXCITATION_VARIANCE = 1e-4

# Offline calibration of the asymmetric noise law
CALIBRATION_BURN_IN = 100_000
CALIBRATION_THINNING = 10
CALIBRATION_RESERVOIR = 1_000_000
CALIBRATION_CHAINS = 1000
CALIBRATION_MAX_DRIFT = 0.05
ASYMMETRIC_ALPHA = -1.0
ASYMMETRIC_BETA = 1.0

# Default admissible set of the benchmark systems
ADMISSIBLE_S = 20.0
ADMISSIBLE_RHO = 0.99
ADMISSIBLE_M_J = 20000.0

"""
Physical constants and measured link figures used as defaults.

The link figures describe the 192 km submarine fibre loop, the SPDC source and
the SNSPD detection system the simulator is calibrated against. Every value
here is a default that link-config files may override.
"""

import math

SPEED_OF_LIGHT = 299_792_458.0  # m/s

PS_PER_SECOND = 1e12
FS_PER_PS = 1000

# FWHM = 2 sqrt(2 ln 2) sigma for a Gaussian
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))

# ─────────────────────────── source ───────────────────────────
ITU_32_CENTRE_NM = 1551.72
ITU_36_CENTRE_NM = 1548.51
ITU_FILTER_FWHM_NM = 0.6
LOCAL_FIDELITY = 0.98

# Source output pair rate and coupling factors that reproduce the measured
# singles (2.1e6 /s local, 55 /s remote) and correlated coincidences (4.3 /s).
# Regenerate with `polarlink calibrate`.
PAIR_RATE = 2.279e7
LOCAL_COUPLING = 0.307
REMOTE_COUPLING = 1.615

# ─────────────────────────── fibre ────────────────────────────
LOOP_LENGTH_M = 192_820.538
LOOP_LOSS_DB = 48.0
ONE_WAY_LOSS_DB = 24.0
BASE_DELAY_PS = 9.45e8
DISPERSION_FWHM_PS = 760.0
GROUP_INDEX = SPEED_OF_LIGHT * BASE_DELAY_PS * 1e-12 / LOOP_LENGTH_M

# Slow birefringence wander, capped at the largest rotation seen on the link
DRIFT_CAP_DEG = 12.0
DRIFT_SPEED_DEG_PER_SQRT_H = 6.0
DRIFT_STEP_S = 60.0

# Residual error of the birefringence compensation, as a Poincaré rotation
# vector in degrees. Puts H-V visibility near 0.81 and D-A near 0.91.
RESIDUAL_ROTVEC_DEG = (18.0, 32.0, 0.0)

# ───────────────────────── detection ──────────────────────────
LOCAL_EFFICIENCY = 0.6
LOCAL_DARK_RATE = 900.0
REMOTE_EFFICIENCY = 0.12
REMOTE_DARK_RATE = 20.0

# 250 ps jitter between the two detectors, split evenly between them
PAIR_JITTER_FWHM_PS = 250.0
DETECTOR_JITTER_FWHM_PS = PAIR_JITTER_FWHM_PS / math.sqrt(2.0)

TAGGER_BIN_PS = 82.3
SYNC_JITTER_FWHM_PS = 500.0
TAGGER_CHANNELS = 2
LOCAL_CHANNEL = 0
REMOTE_CHANNEL = 1

# ───────────────────────── analysis ───────────────────────────
COINCIDENCE_WINDOW_PS = 823.0
SEARCH_RANGE_PS = 1.2e9
COARSE_BIN_PS = 10_000.0
FINE_SPAN_PS = 20_000.0
EC_EFFICIENCY = 1.15
BLOCK_DURATION_S = 100.0

# Analyzer label pairs that carry the correlated coincidences
CORRELATED_LABELS = (("H", "V"), ("V", "H"), ("D", "A"), ("A", "D"))
UNCORRELATED_LABELS = (("H", "H"), ("V", "V"), ("D", "D"), ("A", "A"))

# ───────────────────────── thermal ────────────────────────────
THERMAL_EXPANSION = 5.6e-7  # 1/K
THERMO_OPTIC = 8.45e-6  # 1/K

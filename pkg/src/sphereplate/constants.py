"""Physical constants (CODATA 2018, SI)."""
from scipy import constants as _c

EPS0 = _c.epsilon_0
HBAR = _c.hbar
C_LIGHT = _c.c

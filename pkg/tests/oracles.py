"""Frozen reference values.

Computed once with mpmath at 30 digits (Beta/Kummer closed forms and nested
mp.quad), independently of the package's own quadrature.
"""

import math

# ∫₀¹ e^{4x} x (1-x) dx, also the WF normalizer G at s=4, θ=(2,2)
G_S4_T2 = 1.79994218853575747119094566259
# e^{2} 0.25 / G
DENSITY_S4_T2_HALF = 1.02629075339103036683985874429
E_XX_S4_T2 = 0.180553325103354138908180707787
I_S4_T2 = 0.0451383312758385347270451769468
E_X_S4_T2 = 0.680553325103354138908180707787
E_INV_S4_T2 = 0.722213300413416555632722831149        # E[(1-ξ)/ξ]
E_INV2_S4_T2 = 4.72221330041341655563272283115        # E[ξ/(1-ξ)]
ACCEPT_S4_T2 = 0.197802546874912976415216386966       # E_Beta(2,2)[e^{4ξ}] / e^4
KAPPA_L_S4_T2_03_07 = 0.602101171748661097225320705598
KAPPA_R_S4_T2_03_07 = 3.32845446408129470883469246607
REGEN_S4_T2_04_06 = 0.607476458932447718015797913192
NEUTRAL_ET2_025_05 = 1.52135820619778463013983653374  # E_{0.25}[T_{0.5}^2], θ=1, s=0

LN3x2 = 2 * math.log(3)
LN15x2 = 2 * math.log(1.5)

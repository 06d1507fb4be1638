"""Planar grasp prediction with latent execution-noise marginalization.

The package pairs a grasp prediction network whose training labels are
position-noisy with a noise modelling network that distributes belief over
nine candidate "true execution" patches; their marginalized product is the
trained objective. A synthetic planar world with per-robot structured
execution noise provides ground truth to verify the whole claim chain at
desk scale.
"""

__version__ = "0.1.0"

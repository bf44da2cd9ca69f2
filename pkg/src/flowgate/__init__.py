"""flowgate: physics-guided rectified-flow motion generation with a staged
safety gate, exercised on a deterministic planar chain."""

__version__ = "0.1.0"

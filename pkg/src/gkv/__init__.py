"""Fourth-order mapped multiblock finite-volume operator for gyrokinetic Vlasov advection in single-null edge geometry."""

__version__ = "0.1.0"

"""Matrix-parametrized primal-dual splitting with learned parameters."""

__version__ = "0.1.0"

"""Network momentum across asset classes: graph learning by unrolled
primal-dual splitting, network-momentum trend and position models, and a
volatility-targeted walk-forward backtest."""

__version__ = "0.1.0"

"""Graph regularized point process: Hawkes simulation, GRPP training,
next-event prediction and infectivity recovery."""

__version__ = "0.1.0"

"""Neural 2-opt tour improvement for the Euclidean TSP."""
from .tsp_core import Instance, apply_two_opt, generate_uniform, random_tour, tour_cost

__all__ = ["Instance", "apply_two_opt", "generate_uniform", "random_tour", "tour_cost"]
__version__ = "0.1.0"

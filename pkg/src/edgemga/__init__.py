"""Black-box AdvEdge attack with microbial GA refinement."""

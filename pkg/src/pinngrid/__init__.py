"""Physics-informed surrogates for a small active distribution network."""

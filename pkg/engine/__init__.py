""" Numerical library: models, data, feature distributions, voting and aggregation. """

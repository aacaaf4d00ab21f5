# almcast tests

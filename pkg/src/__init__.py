# Makes src importable as a package (imports read src.coverage_model...).

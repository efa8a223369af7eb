"""
Coverage Model Package
----------------------

Bayesian estimation of national immunization coverage from administrative,
official and survey estimates.

Subpackages:
- models: pydantic records, configs and report tables.
- core: ingestion, preprocessing, model densities, MCMC engine and posterior summaries.
- workflows: the simulation-study experiment.
- cli: command-line surface.
"""

__version__ = "0.1.0"

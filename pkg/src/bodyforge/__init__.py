"""bodyforge: desk-scale full-body identity conditioning for a toy diffusion
generator, plus the data curation and grading tooling around it."""

__version__ = "0.1.0"

"""One-step pansharpening via flow matching trained with an unbalanced OT dual objective."""

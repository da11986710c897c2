# This package provides a desk-scale learnable-query adapter with its CLI

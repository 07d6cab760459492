"""Dense linear algebra, reverse-mode differentiation and seeded random streams."""

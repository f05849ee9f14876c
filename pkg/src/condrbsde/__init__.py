"""Conditionally reflected backward equations on finite scenario trees."""

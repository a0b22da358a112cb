"""Bundled fixtures: site map, demo scenario, detector benchmark table."""

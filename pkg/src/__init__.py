"""Two-stage genome-wide association study planner."""

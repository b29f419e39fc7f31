"""FastAPI adapter exposing the pose solver."""

"""Joint building height / footprint estimation with cross-task coupling."""

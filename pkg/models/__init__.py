# Models package





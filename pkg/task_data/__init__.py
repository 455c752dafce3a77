"""Task datasets: IDX files, synthetic glyphs and the 2-D toy task."""

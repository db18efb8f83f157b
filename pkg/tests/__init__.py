# Tests package for Disc Grade

# Tests package for the attention patch lab

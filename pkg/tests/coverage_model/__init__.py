# Tests for the coverage model package

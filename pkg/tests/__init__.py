# Test package for the Recurring Vulnerability Manager API

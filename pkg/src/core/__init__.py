# Core business logic components
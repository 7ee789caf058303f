# Run configuration: dotenv-backed RunConfig

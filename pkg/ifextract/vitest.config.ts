import { defineConfig } from 'vitest/config';

export default defineConfig({
  test: {
    include: ['test/**/*.test.ts'],
    // the conformance test shells out to the search engine's CLI
    testTimeout: 120_000,
  },
});

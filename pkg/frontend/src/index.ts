export * from './types.js';
export * from './api.js';
export * from './views.js';
export * from './poller.js';
export * from './render.js';
export * from './app.js';

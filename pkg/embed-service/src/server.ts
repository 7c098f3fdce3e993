import { createApp } from './app.js';
import { createEncoder } from './encoder.js';

const port = process.env.PORT ? parseInt(process.env.PORT, 10) : 8932;
const encoder = createEncoder();

encoder
  .ready()
  .then(() => {
    console.log(`encoder ready: model=${encoder.model} dim=${encoder.dim}`);
  })
  .catch((err) => {
    console.error(`encoder load failed (requests will get 503): ${err}`);
  });

createApp(encoder).listen(port, () => {
  console.log(`embed-service listening on :${port}`);
});

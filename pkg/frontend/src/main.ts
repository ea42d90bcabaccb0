import { TransferClient } from './api.js';
import { Session } from './state.js';
import { App } from './ui.js';

const session = new Session(window.sessionStorage);
const app = new App(document.getElementById('app')!, session, new TransferClient());
app.mount();

import { viewerApp } from "./app.js";

const params = new URLSearchParams(window.location.search);
const serviceUrl = params.get("service") ?? "http://127.0.0.1:8765";
const mount = document.getElementById("app");
if (!mount) {
  throw new Error("missing #app mount point");
}
void viewerApp(serviceUrl, mount);

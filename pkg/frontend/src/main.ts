import { mount } from "./app.js";

if (typeof window !== "undefined" && typeof document !== "undefined") {
  const start = () => {
    mount(window);
  };
  if (document.readyState === "loading") {
    document.addEventListener("DOMContentLoaded", start);
  } else {
    start();
  }
}

/** Keyboard-first labeling: T = match, F = no match, R = flag for review,
 * arrow keys nudge the threshold marker. Inactive while typing in inputs. */

export interface KeyboardHandlers {
  onMatch: () => void;
  onNoMatch: () => void;
  onFlag: () => void;
  onMarkerStep: (direction: -1 | 1) => void;
}

export function bindKeyboard(doc: Document, handlers: KeyboardHandlers): () => void {
  const onKeyDown = (event: KeyboardEvent) => {
    const target = event.target as HTMLElement | null;
    if (target && (target.tagName === "INPUT" || target.tagName === "TEXTAREA")) {
      return;
    }
    switch (event.key) {
      case "t":
      case "T":
        event.preventDefault();
        handlers.onMatch();
        break;
      case "f":
      case "F":
        event.preventDefault();
        handlers.onNoMatch();
        break;
      case "r":
      case "R":
        event.preventDefault();
        handlers.onFlag();
        break;
      case "ArrowLeft":
        event.preventDefault();
        handlers.onMarkerStep(-1);
        break;
      case "ArrowRight":
        event.preventDefault();
        handlers.onMarkerStep(1);
        break;
    }
  };
  doc.addEventListener("keydown", onKeyDown);
  return () => doc.removeEventListener("keydown", onKeyDown);
}
